//! Agent Web environment: a text-structured page graph with click, type,
//! buy, and back actions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workflow::ActionDescriptor;

use super::{invalid, FormMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRoute {
    pub field: String,
    pub text: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub id: String,
    /// Items displayed on the page; clicking one follows `click_routes`.
    #[serde(default)]
    pub items: Vec<String>,
    /// Item purchasable from this page, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buy: Option<String>,
    #[serde(default)]
    pub click_routes: BTreeMap<String, String>,
    #[serde(default)]
    pub type_routes: Vec<TypeRoute>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageGraph {
    pub start_page: String,
    pub pages: BTreeMap<String, Page>,
}

impl PageGraph {
    pub fn build(instance_id: &str, start_page: String, pages: Vec<Page>) -> Result<PageGraph> {
        let mut map = BTreeMap::new();
        for page in pages {
            if map.insert(page.id.clone(), page).is_some() {
                return Err(Error::Load(format!(
                    "web instance {instance_id}: duplicate page id"
                )));
            }
        }
        let graph = PageGraph { start_page, pages: map };
        if !graph.pages.contains_key(&graph.start_page) {
            return Err(Error::Load(format!(
                "web instance {instance_id}: start_page {} not among pages",
                graph.start_page
            )));
        }
        for page in graph.pages.values() {
            for (item, to) in &page.click_routes {
                if !graph.pages.contains_key(to) {
                    return Err(Error::Load(format!(
                        "web instance {instance_id}: click route {item} on {} targets missing page {to}",
                        page.id
                    )));
                }
                if !page.items.contains(item) {
                    return Err(Error::Load(format!(
                        "web instance {instance_id}: click route {item} on {} is not a listed item",
                        page.id
                    )));
                }
            }
            for route in &page.type_routes {
                if !graph.pages.contains_key(&route.to) {
                    return Err(Error::Load(format!(
                        "web instance {instance_id}: type route on {} targets missing page {}",
                        page.id, route.to
                    )));
                }
            }
        }
        Ok(graph)
    }

    /// Breadth-first number of actions needed to reach a page where `item`
    /// is purchasable. `None` if unreachable.
    pub fn goal_depth(&self, item: &str) -> Option<u32> {
        let mut frontier = vec![self.start_page.as_str()];
        let mut seen: std::collections::BTreeSet<&str> = frontier.iter().copied().collect();
        let mut depth = 0;
        while !frontier.is_empty() {
            for page_id in &frontier {
                let page = &self.pages[*page_id];
                if page.buy.as_deref() == Some(item) {
                    return Some(depth);
                }
            }
            let mut next = Vec::new();
            for page_id in frontier.drain(..) {
                let page = &self.pages[page_id];
                for to in page.click_routes.values() {
                    if seen.insert(to) {
                        next.push(to.as_str());
                    }
                }
                for route in &page.type_routes {
                    if seen.insert(&route.to) {
                        next.push(route.to.as_str());
                    }
                }
            }
            frontier = next;
            depth += 1;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebState {
    pub current_page: String,
    pub history: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purchased: Option<String>,
    #[serde(default)]
    pub forms: FormMap,
}

pub struct WebEnv {
    pub graph: PageGraph,
}

impl WebEnv {
    pub fn initial_state(&self) -> WebState {
        WebState {
            current_page: self.graph.start_page.clone(),
            history: Vec::new(),
            purchased: None,
            forms: FormMap::new(),
        }
    }

    pub fn describe(&self, state: &WebState) -> String {
        let page = &self.graph.pages[&state.current_page];
        format!("On page {}; items [{}]", page.id, page.items.join(", "))
    }

    pub fn apply(&self, state: &WebState, action: &ActionDescriptor) -> (String, bool, WebState) {
        let page = &self.graph.pages[&state.current_page];
        match (action.name.as_str(), action.args.len()) {
            ("Click", 1) => {
                let item = action.args[0].as_str();
                match page.click_routes.get(item) {
                    Some(to) => {
                        let mut next = state.clone();
                        next.history.push(state.current_page.clone());
                        next.current_page = to.clone();
                        let target = &self.graph.pages[to];
                        (
                            format!("Navigated to {}; items [{}]", to, target.items.join(", ")),
                            true,
                            next,
                        )
                    }
                    None => (
                        format!("NO_SUCH_ITEM {item} on {}", state.current_page),
                        false,
                        state.clone(),
                    ),
                }
            }
            ("Type", 2) => {
                let field = action.args[0].as_str();
                let text = action.args[1].as_str();
                let route = page
                    .type_routes
                    .iter()
                    .find(|r| r.field == field && r.text == text);
                match route {
                    Some(route) => {
                        let mut next = state.clone();
                        next.forms.insert(field.to_string(), text.to_string());
                        next.history.push(state.current_page.clone());
                        next.current_page = route.to.clone();
                        let target = &self.graph.pages[&route.to];
                        (
                            format!(
                                "Typed {text} into {field}; now on {}; items [{}]",
                                route.to,
                                target.items.join(", ")
                            ),
                            true,
                            next,
                        )
                    }
                    None => (
                        format!("NO_ROUTE typing into {field} on {}", state.current_page),
                        false,
                        state.clone(),
                    ),
                }
            }
            ("Buy", 1) => {
                let item = action.args[0].as_str();
                if page.buy.as_deref() == Some(item) {
                    let mut next = state.clone();
                    next.purchased = Some(item.to_string());
                    (format!("PURCHASED {item}"), true, next)
                } else {
                    (
                        format!("CANNOT_BUY {item} on {}", state.current_page),
                        false,
                        state.clone(),
                    )
                }
            }
            ("Back", 0) => match state.history.last() {
                Some(prev) => {
                    let mut next = state.clone();
                    next.current_page = prev.clone();
                    next.history.pop();
                    let target = &self.graph.pages[prev];
                    (
                        format!("Returned to {}; items [{}]", prev, target.items.join(", ")),
                        true,
                        next,
                    )
                }
                None => ("NO_HISTORY to go back to".to_string(), false, state.clone()),
            },
            _ => (invalid(action, "browser"), false, state.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> PageGraph {
        let pages = vec![
            Page {
                id: "home".into(),
                items: vec!["item_3".into()],
                buy: None,
                click_routes: [("item_3".to_string(), "page_item_3".to_string())].into(),
                type_routes: vec![],
            },
            Page {
                id: "page_item_3".into(),
                items: vec![],
                buy: Some("item_3".into()),
                click_routes: BTreeMap::new(),
                type_routes: vec![],
            },
        ];
        PageGraph::build("w0", "home".into(), pages).unwrap()
    }

    fn action(name: &str, args: &[&str]) -> ActionDescriptor {
        ActionDescriptor { name: name.into(), args: args.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn click_navigates_when_item_present() {
        let env = WebEnv { graph: graph() };
        let s0 = env.initial_state();
        let (out, ok, s1) = env.apply(&s0, &action("Click", &["item_3"]));
        assert!(ok);
        assert!(out.contains("Navigated to page_item_3"));
        assert_eq!(s1.current_page, "page_item_3");
    }

    #[test]
    fn buy_from_item_page_is_terminal_purchase() {
        let env = WebEnv { graph: graph() };
        let s0 = env.initial_state();
        let (_, _, s1) = env.apply(&s0, &action("Click", &["item_3"]));
        let (out, ok, s2) = env.apply(&s1, &action("Buy", &["item_3"]));
        assert!(ok);
        assert_eq!(out, "PURCHASED item_3");
        assert_eq!(s2.purchased.as_deref(), Some("item_3"));
    }

    #[test]
    fn buy_elsewhere_fails() {
        let env = WebEnv { graph: graph() };
        let (out, ok, s1) = env.apply(&env.initial_state(), &action("Buy", &["item_3"]));
        assert!(!ok);
        assert!(out.starts_with("CANNOT_BUY"));
        assert!(s1.purchased.is_none());
    }

    #[test]
    fn back_pops_history() {
        let env = WebEnv { graph: graph() };
        let (_, _, s1) = env.apply(&env.initial_state(), &action("Click", &["item_3"]));
        let (out, ok, s2) = env.apply(&s1, &action("Back", &[]));
        assert!(ok);
        assert!(out.starts_with("Returned to home"));
        assert_eq!(s2.current_page, "home");
        let (_, ok, _) = env.apply(&env.initial_state(), &action("Back", &[]));
        assert!(!ok);
    }

    #[test]
    fn goal_depth_counts_actions_to_purchase_page() {
        assert_eq!(graph().goal_depth("item_3"), Some(1));
        assert_eq!(graph().goal_depth("item_9"), None);
    }
}
