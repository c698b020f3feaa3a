fn main() {
    let (code, _) = levyscale_cli::run_command(std::env::args_os());
    std::process::exit(code);
}
