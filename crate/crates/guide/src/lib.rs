//! The book chapters, included as module docs so `cargo test` compiles and
//! runs every snippet the guide shows.
