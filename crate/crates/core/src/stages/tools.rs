//! Tool-call grammar: fenced action blocks in plan text and the
//! `Name` / `Name(arg, ...)` action syntax.

use crate::workflow::ActionDescriptor;

pub const ACTION_FENCE_OPEN: &str = "```action";
pub const ACTION_FENCE_CLOSE: &str = "```";

/// Extract the first action from a fenced ```action block, if present.
pub fn parse_fenced_action(plan_text: &str) -> Option<ActionDescriptor> {
    let mut in_block = false;
    for line in plan_text.lines() {
        let trimmed = line.trim();
        if !in_block {
            if trimmed == ACTION_FENCE_OPEN {
                in_block = true;
            }
            continue;
        }
        if trimmed == ACTION_FENCE_CLOSE {
            return None;
        }
        if !trimmed.is_empty() {
            return parse_action(trimmed);
        }
    }
    None
}

/// Parse `Name` or `Name(arg1,arg2)`. Returns `None` for anything that does
/// not fit the grammar; the caller reports INVALID_ACTION.
pub fn parse_action(text: &str) -> Option<ActionDescriptor> {
    let text = text.trim();
    if text.is_empty() {
        return None;
    }
    let (name, args) = match text.find('(') {
        None => (text, Vec::new()),
        Some(open) => {
            if !text.ends_with(')') {
                return None;
            }
            let inner = &text[open + 1..text.len() - 1];
            if inner.contains('(') || inner.contains(')') {
                return None;
            }
            let args: Vec<String> = if inner.trim().is_empty() {
                Vec::new()
            } else {
                inner.split(',').map(|a| a.trim().to_string()).collect()
            };
            (&text[..open], args)
        }
    };
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
        || !name.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
    {
        return None;
    }
    Some(ActionDescriptor { name: name.to_string(), args })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_bare_and_parenthesized_actions() {
        assert_eq!(
            parse_action("Stop"),
            Some(ActionDescriptor { name: "Stop".into(), args: vec![] })
        );
        assert_eq!(
            parse_action("Click(item_3)"),
            Some(ActionDescriptor { name: "Click".into(), args: vec!["item_3".into()] })
        );
        assert_eq!(
            parse_action("Type(search, gadget)"),
            Some(ActionDescriptor {
                name: "Type".into(),
                args: vec!["search".into(), "gadget".into()]
            })
        );
    }

    #[test]
    fn rejects_malformed_actions() {
        assert_eq!(parse_action("Click(item"), None);
        assert_eq!(parse_action("(x)"), None);
        assert_eq!(parse_action("9bad()"), None);
        assert_eq!(parse_action("a(b(c))"), None);
        assert_eq!(parse_action(""), None);
    }

    #[test]
    fn extracts_first_action_from_fenced_block() {
        let plan = "PLAN: open the page\n```action\nClick(item_3)\n```\ntrailing";
        assert_eq!(
            parse_fenced_action(plan),
            Some(ActionDescriptor { name: "Click".into(), args: vec!["item_3".into()] })
        );
        assert_eq!(parse_fenced_action("PLAN: nothing to do"), None);
        assert_eq!(parse_fenced_action("```action\n```"), None);
    }
}
