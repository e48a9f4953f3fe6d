fn main() -> std::process::ExitCode {
    chopt::cli::main()
}
