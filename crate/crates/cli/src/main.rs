fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("OE_FORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            oe_forge_core::par::init_threads(n);
        }
    }
    std::process::exit(oe_forge::run(std::env::args_os()));
}
