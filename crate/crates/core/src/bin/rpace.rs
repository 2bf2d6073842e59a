fn main() -> std::process::ExitCode {
    rpace::cli::run(std::env::args_os())
}
