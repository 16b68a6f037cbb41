fn main() {
    std::process::exit(ipslab::cli::main_from(std::env::args_os()));
}
