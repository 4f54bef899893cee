fn main() {
    env_logger::init();
    std::process::exit(longstyle::runner::cli::run(std::env::args_os()));
}
