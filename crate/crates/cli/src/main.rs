fn main() {
    std::process::exit(air_cli::run_cli(std::env::args_os()));
}
