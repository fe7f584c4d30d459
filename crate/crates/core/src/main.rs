fn main() -> std::process::ExitCode {
    cicd::cli::main()
}
