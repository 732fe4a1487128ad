use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(bodyscene_cli::run(std::env::args_os()))
}
