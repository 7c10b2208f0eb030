fn main() -> std::process::ExitCode {
    vidclip::cli::main()
}
