fn main() {
    std::process::exit(spatialnb::cli::main());
}
