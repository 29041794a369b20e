use std::process::ExitCode;

fn main() -> ExitCode {
    scenebooth_cli::run()
}
