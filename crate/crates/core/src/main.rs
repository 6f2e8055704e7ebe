use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("AGORA_LOG", "warn")).init();
    agora::cli::main()
}
