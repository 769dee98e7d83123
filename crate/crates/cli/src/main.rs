use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(kgc_cli::run(std::env::args_os().collect()))
}
