fn main() {
    std::process::exit(flowlab::app::main_with_args(std::env::args_os()));
}
