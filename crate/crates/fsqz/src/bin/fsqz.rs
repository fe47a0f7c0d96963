fn main() -> std::process::ExitCode {
    fsqz::cli::main()
}
