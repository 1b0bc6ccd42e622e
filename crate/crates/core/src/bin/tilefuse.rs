use std::process::ExitCode;

fn main() -> ExitCode {
    tilefuse::cli::main_with_args(std::env::args_os())
}
