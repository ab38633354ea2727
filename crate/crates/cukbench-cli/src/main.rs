fn main() {
    std::process::exit(cukbench_cli::run(std::env::args_os()));
}
