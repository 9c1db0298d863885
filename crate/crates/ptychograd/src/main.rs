fn main() {
    std::process::exit(ptychograd::cli::run());
}
