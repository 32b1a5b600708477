fn main() -> std::process::ExitCode {
    coded_dl::cli::main()
}
