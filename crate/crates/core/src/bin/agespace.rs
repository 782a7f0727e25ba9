fn main() {
    std::process::exit(agespace::cli::main_entry(std::env::args_os()));
}
