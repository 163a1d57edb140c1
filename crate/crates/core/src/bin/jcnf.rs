fn main() {
    std::process::exit(jcnf::cli::run(std::env::args_os()));
}
