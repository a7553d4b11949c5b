fn main() {
    std::process::exit(sca_core::cli::main());
}
