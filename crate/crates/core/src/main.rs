fn main() {
    env_logger::init();
    std::process::exit(grsaa::cli::run(std::env::args_os()));
}
