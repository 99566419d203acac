fn main() {
    std::process::exit(hico_cli::main_entry());
}
