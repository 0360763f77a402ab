fn main() {
    std::process::exit(sdae_cli::main_with_stdio());
}
