fn main() {
    std::process::exit(gait_dynamics::cli::run(std::env::args_os()));
}
