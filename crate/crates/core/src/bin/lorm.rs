use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = lorm::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    ExitCode::from(code.clamp(0, 255) as u8)
}
