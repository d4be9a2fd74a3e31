use std::process::ExitCode;

fn main() -> ExitCode {
    tomarket::cli::run()
}
