fn main() {
    std::process::exit(seqdet::cli::main_with(std::env::args_os()));
}
