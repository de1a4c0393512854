namespace utts {}
