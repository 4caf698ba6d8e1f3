fn main() {
    std::process::exit(crossgee::cli::main());
}
