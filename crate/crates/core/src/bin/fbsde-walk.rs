fn main() {
    std::process::exit(fbsde_walk::cli::run(std::env::args_os()));
}
