use std::process::ExitCode;

fn main() -> ExitCode {
    crowdroad::cli::main_with(std::env::args_os())
}
