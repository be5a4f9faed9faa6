use stsn_cli::commands;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(&args) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("{}", err.one_line());
            std::process::exit(err.exit_code() as i32);
        }
    }
}
