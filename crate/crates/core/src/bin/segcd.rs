fn main() {
    std::process::exit(segcd::cli::run_command(std::env::args_os()));
}
