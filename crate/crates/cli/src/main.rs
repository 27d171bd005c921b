fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROBGEO_LOG", "warn")).init();
    std::process::exit(probgeo_cli::run(std::env::args_os()));
}
