fn main() {
    std::process::exit(atlaseg_cli::run(std::env::args_os()));
}
