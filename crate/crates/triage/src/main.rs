fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(mcunet_triage::cli::main_with(std::env::args_os()))
}
