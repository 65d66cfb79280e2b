from pathlib import Path

import yaml

from .data import BASE_LANG, LOCALE_DIR


def load_locales(path: str) -> dict[str, dict[str, str]]:
    """Reads every <lang>.yaml message file in the directory, keyed by language"""
    merged = {}
    for file_path in sorted(Path(path).glob("*.y*ml")):
        with open(file_path, "r", encoding="utf-8") as file:
            merged[file_path.stem] = yaml.safe_load(file) or {}

    if BASE_LANG not in merged:
        raise FileNotFoundError(f"No {BASE_LANG} messages in {path}")
    return merged


locale = load_locales(LOCALE_DIR)

current_lang = BASE_LANG


def languages() -> list[str]:
    return sorted(locale)


def set_lang(lang: str) -> None:
    global current_lang
    if lang not in locale:
        raise ValueError(f"Unknown language: {lang}")
    current_lang = lang


def getlocale(name: str, **fields) -> str:
    # missing translations fall back to the base language
    message = locale[current_lang].get(name) or locale[BASE_LANG][name]
    return message.format(**fields) if fields else message
