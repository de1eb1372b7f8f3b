//! Name → strategy lookup used wherever the pipeline lets configuration pick
//! between interchangeable algorithms.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Something that can be registered under a stable name.
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: Vec<Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    /// Adds a strategy; a later registration with the same name replaces the earlier one.
    pub fn register(&mut self, strategy: Arc<T>) -> &mut Self {
        self.entries.retain(|e| e.name() != strategy.name());
        self.entries.push(strategy);
        self
    }

    pub fn with(mut self, strategy: Arc<T>) -> Self {
        self.register(strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.iter().find(|e| e.name() == name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

impl<T: ?Sized + Named> std::fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("kind", &self.kind).field("entries", &self.names()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Named {
        fn greet(&self) -> String;
    }

    struct Hello(&'static str);
    impl Named for Hello {
        fn name(&self) -> &'static str {
            self.0
        }
    }
    impl Greeter for Hello {
        fn greet(&self) -> String {
            format!("hello from {}", self.0)
        }
    }

    #[test]
    fn lookup_and_unknown() {
        let reg: Registry<dyn Greeter> = Registry::<dyn Greeter>::new("greeter").with(Arc::new(Hello("a"))).with(Arc::new(Hello("b")));
        assert_eq!(reg.get("b").unwrap().greet(), "hello from b");
        assert_eq!(reg.names(), vec!["a", "b"]);
        match reg.get("zzz") {
            Err(Error::UnknownStrategy { available, .. }) => assert_eq!(available, "a, b"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
