from minisol.cli import _entry

_entry()
