fn main() {
    std::process::exit(gradproj_cli::run(std::env::args_os()));
}
