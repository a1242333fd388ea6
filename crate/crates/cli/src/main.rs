use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(rscn_cli::run(std::env::args_os()))
}
