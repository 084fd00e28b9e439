fn main() {
    std::process::exit(scenelay::cli::run());
}
