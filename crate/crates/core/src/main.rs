fn main() {
    std::process::exit(latent_sde::cli::run());
}
