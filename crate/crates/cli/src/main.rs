use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn,vulaug=info,vulaug_core=info")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    std::process::exit(vulaug::run(std::env::args_os().collect()));
}
