use std::process::ExitCode;

fn main() -> ExitCode {
    uvstyle_cli::run(std::env::args_os())
}
