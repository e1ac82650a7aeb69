fn main() {
    std::process::exit(leakproto::cli::main_with(std::env::args_os()));
}
