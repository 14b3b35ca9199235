fn main() {
    std::process::exit(dpc::cli::main_with_args(std::env::args_os()));
}
