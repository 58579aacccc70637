fn main() {
    std::process::exit(boxpose::cli::run());
}
