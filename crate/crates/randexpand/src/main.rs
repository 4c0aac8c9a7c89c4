fn main() {
    std::process::exit(randexpand::cli::main_entry());
}
