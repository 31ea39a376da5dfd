use std::process::ExitCode;

fn main() -> ExitCode {
    mist::cli::main_with(std::env::args_os())
}
