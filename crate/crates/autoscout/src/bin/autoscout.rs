use std::process::ExitCode;

fn main() -> ExitCode {
    autoscout::cli::main()
}
