use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match mtau_cli::run_from(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                if !clap_err.use_stderr() {
                    return ExitCode::SUCCESS;
                }
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(mtau_cli::exit_code(&err))
        }
    }
}
