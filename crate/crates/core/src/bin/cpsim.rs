fn main() {
    std::process::exit(cpsim::cli::main());
}
