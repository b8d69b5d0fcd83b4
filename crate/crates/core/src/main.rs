use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DISCOREV_LOG", "warn"))
        .format_timestamp(None)
        .init();
    discorev::cli::run(std::env::args_os())
}
