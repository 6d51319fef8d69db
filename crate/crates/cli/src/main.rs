fn main() {
    std::process::exit(fuselab_cli::run(std::env::args_os()));
}
