//! Holds the `acceptance` test target; run it with
//! `cargo test -p sms-acceptance --test acceptance`.
