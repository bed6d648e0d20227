fn main() -> std::process::ExitCode {
    phyc_cli::run()
}
