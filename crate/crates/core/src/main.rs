fn main() -> std::process::ExitCode {
    feedmix::app::cli::main()
}
