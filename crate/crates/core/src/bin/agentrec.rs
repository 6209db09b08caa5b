fn main() {
    std::process::exit(agentrec::cli::main());
}
