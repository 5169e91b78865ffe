fn main() -> std::process::ExitCode {
    scsf_core::cli::main()
}
