fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let mut config = cbindgen::Config::default();
    config.language = cbindgen::Language::C;
    config.include_guard = Some("BOXPOSE_H".into());
    config.cpp_compat = true;
    config.documentation = true;
    config.header = Some("/* C interface to the boxpose pose-estimation library. */".into());

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen failed")
        .write_to_file(format!("{crate_dir}/include/boxpose.h"));

    println!("cargo:rerun-if-changed=src/lib.rs");
}
