fn main() {
    std::process::exit(coda::cli::main_entry(std::env::args_os()));
}
