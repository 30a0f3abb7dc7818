use std::process::ExitCode;

fn main() -> ExitCode {
    phgcn::cli::run()
}
