fn main() {
    std::process::exit(sceneflow::cli::run(std::env::args_os()));
}
