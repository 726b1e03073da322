fn main() {
    std::process::exit(corrstyle::pipeline::cli::run());
}
