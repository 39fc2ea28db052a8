fn main() {
    std::process::exit(tse_cli::run_cli(std::env::args_os()));
}
