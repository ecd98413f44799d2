from .text import DEFAULT_BLOCKLIST, DEFAULT_MODIFIERS, ModifierLexicon, words

__all__ = ["DEFAULT_BLOCKLIST", "DEFAULT_MODIFIERS", "ModifierLexicon", "words"]
