fn main() {
    std::process::exit(lmmprobe::run(std::env::args_os()));
}
