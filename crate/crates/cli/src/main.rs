mod args;
mod commands;

use std::process::ExitCode;

use gcisg_core::Error;

/// Process exit status of a failed command.
pub enum Failure {
    Core(Error),
    GradcheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Core(Error::Config(_)) => 2,
        Failure::Core(Error::Divergence { .. }) => 3,
        Failure::GradcheckFailed => 4,
        Failure::Core(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // usage errors exit with clap's status 2, like config errors
    let matches = args::command().get_matches();
    match commands::dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::GradcheckFailed => eprintln!("error: gradient check failed"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
