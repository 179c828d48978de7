"""Helpers shared by the test modules: seeded random canonical trees."""
from __future__ import annotations

import random
import string as _ascii

from .values import (
    CanonicalMessage,
    CanonicalValue,
    boolean,
    floating,
    integer,
    list_of,
    map_of,
    null,
    string,
)

# exercises the XML escaping paths as well as plain names
_KEY_ALPHABET = _ascii.ascii_letters + _ascii.digits + '_-. :/çã€x'
_TEXT_CHOICES = ('', 'plain', 'com acento ç', 'a<b>&"c"', ' padded ', 'line\nbreak', 'cr\rlf', 'tab\t', '\x01ctl', '😀', '<!-- x -->')


def random_key(rng: random.Random) -> str:
    return ''.join(rng.choice(_KEY_ALPHABET) for _ in range(rng.randint(1, 8)))


def random_scalar(rng: random.Random) -> CanonicalValue:
    choice = rng.randrange(5)
    if choice == 0:
        return null()
    if choice == 1:
        return boolean(rng.random() < 0.5)
    if choice == 2:
        return integer(rng.choice([0, -1, 2 ** 63 - 1, -(2 ** 63), rng.randint(-10 ** 9, 10 ** 9)]))
    if choice == 3:
        return floating(rng.choice([0.0, -0.0, 1e-300, 1.7976931348623157e308, rng.uniform(-1e6, 1e6), 0.1]))
    return string(rng.choice(_TEXT_CHOICES) + random_key(rng))


def random_value(rng: random.Random, depth: int = 0, max_depth: int = 5) -> CanonicalValue:
    if depth >= max_depth or rng.random() < 0.4:
        return random_scalar(rng)
    if rng.random() < 0.5:
        return list_of(random_value(rng, depth + 1, max_depth) for _ in range(rng.randint(0, 4)))
    pairs = {}
    for _ in range(rng.randint(0, 4)):
        pairs[random_key(rng)] = random_value(rng, depth + 1, max_depth)
    return map_of(pairs)


def random_message(rng: random.Random, capability: str = 'weather.temperature.read') -> CanonicalMessage:
    headers = {random_key(rng): rng.choice(_TEXT_CHOICES) for _ in range(rng.randint(0, 2))}
    return CanonicalMessage(
        message_id=f'msg-{rng.getrandbits(32):08x}',
        capability=capability,
        timestamp_ms=rng.randint(0, 2 ** 40),
        body=random_value(rng),
        correlation_id=rng.choice([None, f'corr-{rng.randint(1, 99)}']),
        headers=headers,
    )
