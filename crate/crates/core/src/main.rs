fn main() -> std::process::ExitCode {
    giftlab::harness::cli::main_from_args(std::env::args_os())
}
