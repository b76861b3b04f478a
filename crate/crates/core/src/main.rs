fn main() {
    std::process::exit(streamsgd::cli::run_cli(std::env::args_os()));
}
