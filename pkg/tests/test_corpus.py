import numpy as np
import pytest

from metagec.bpe import learn_bpe
from metagec.corpus import (
    BOS, EOS, PAD, UNK, DomainDataset, SentencePair, SplitSpec, Vocabulary, load_parallel, make_splits, write_parallel,
)


def _dataset(domain, n):
    return DomainDataset(domain, [SentencePair(("s", str(i)), ("t", str(i)), domain, f"{domain}:{i}") for i in range(n)])


def _ids(ds):
    return {p.pair_id for p in ds.pairs}


@pytest.fixture
def spec():
    return SplitSpec(source_domains=("a", "b"), valid_domain="v", test_domains=("t",))


class TestSplits:
    def test_valid_domain_exact_counts(self, spec):
        _, valid, _ = make_splits([_dataset("a", 1000), _dataset("b", 1000), _dataset("v", 1400), _dataset("t", 1100)], spec, 0)
        assert (len(valid.train), len(valid.dev), len(valid.test)) == (200, 800, 400)
        assert not (_ids(valid.train) & _ids(valid.dev) or _ids(valid.train) & _ids(valid.test) or _ids(valid.dev) & _ids(valid.test))

    def test_test_domain_two_to_one(self, spec):
        _, _, (test,) = make_splits([_dataset("a", 1000), _dataset("b", 1000), _dataset("v", 1400), _dataset("t", 1100)], spec, 0)
        assert (len(test.train), len(test.dev), len(test.test)) == (200, 600, 300)
        assert len(_ids(test.train) | _ids(test.dev) | _ids(test.test)) == 1100

    def test_source_counts(self, spec):
        sources, _, _ = make_splits([_dataset("a", 1200), _dataset("b", 1000), _dataset("v", 1400), _dataset("t", 300)], spec, 3)
        assert [len(s) for s in sources] == [1000, 1000]
        assert len(_ids(sources[0])) == 1000

    def test_same_seed_same_split(self, spec):
        data = [_dataset("a", 1100), _dataset("b", 1100), _dataset("v", 1500), _dataset("t", 500)]
        first, second = make_splits(data, spec, 9), make_splits(data, spec, 9)
        assert _ids(first[1].test) == _ids(second[1].test)
        assert [_ids(s) for s in first[0]] == [_ids(s) for s in second[0]]

    def test_other_seed_differs(self, spec):
        data = [_dataset("a", 1100), _dataset("b", 1100), _dataset("v", 1500), _dataset("t", 500)]
        assert _ids(make_splits(data, spec, 1)[0][0]) != _ids(make_splits(data, spec, 2)[0][0])

    def test_shortfall_names_domain(self, spec):
        with pytest.raises(ValueError, match=r"'v'.*short by 10"):
            make_splits([_dataset("a", 1000), _dataset("b", 1000), _dataset("v", 1390), _dataset("t", 300)], spec, 0)

    def test_missing_domain(self, spec):
        with pytest.raises(ValueError, match="no dataset"):
            make_splits([_dataset("a", 1000)], spec, 0)

    def test_counts_must_be_positive(self):
        with pytest.raises(ValueError):
            SplitSpec(("a",), "v", ("t",), source_count=0)


class TestLoadParallel:
    def test_two_lines(self, tmp_path):
        path = tmp_path / "de.tsv"
        path.write_text("he go .\the goes .\nshe run .\tshe runs .\n")
        ds = load_parallel(path)
        assert ds.domain == "de" and len(ds) == 2
        assert ds.pairs[0].source == ("he", "go", ".") and ds.pairs[1].target == ("she", "runs", ".")

    def test_header_names_domain(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("#domain:ru\na\tb\n")
        assert load_parallel(path).domain == "ru"

    def test_missing_tab_names_line(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("a\tb\nno tab here\n")
        with pytest.raises(ValueError, match=":2:"):
            load_parallel(path)

    def test_crlf_equals_lf(self, tmp_path):
        lf, crlf = tmp_path / "lf.tsv", tmp_path / "crlf.tsv"
        lf.write_bytes(b"#domain:fr\na b\tc d\ne\tf\n")
        crlf.write_bytes(b"#domain:fr\r\na b\tc d\r\ne\tf\r\n")
        assert load_parallel(lf) == load_parallel(crlf)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            load_parallel(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("#domain:mo\n")
        with pytest.raises(ValueError, match="no sentence pairs"):
            load_parallel(path)

    def test_write_then_load(self, tmp_path):
        ds = DomainDataset("vi", [SentencePair(("a", "b"), ("c",), "vi", "vi:0"), SentencePair(("d",), ("e", "f"), "vi", "vi:1")])
        write_parallel(ds, tmp_path / "out.tsv")
        assert load_parallel(tmp_path / "out.tsv") == ds


class TestTypes:
    def test_empty_side_rejected(self):
        with pytest.raises(ValueError):
            SentencePair((), ("a",), "d")

    def test_mixed_domains_rejected(self):
        with pytest.raises(ValueError):
            DomainDataset("a", [SentencePair(("x",), ("y",), "b")])


class TestVocabulary:
    def test_specials_reserved(self):
        vocab = Vocabulary.build([["ab", "ba"]], learn_bpe([["ab"]], 1))
        assert vocab.symbols[:4] == ["<unk>", "<pad>", "<s>", "</s>"]
        assert (UNK, PAD, BOS, EOS) == (0, 1, 2, 3)

    def test_encode_decode(self):
        corpus = [["the", "cat", "sat"], ["a", "hat"]]
        vocab = Vocabulary.build(corpus, learn_bpe(corpus, 4))
        ids = vocab.encode(["the", "hat"])
        assert vocab.decode([BOS, *ids, EOS, PAD]) == ["the", "hat"]

    def test_unknown_symbols_map_to_unk(self):
        vocab = Vocabulary.build([["ab"]], learn_bpe([["ab"]], 1))
        assert vocab.encode(["zz"]) == [UNK, UNK]

    def test_save_load(self, tmp_path):
        corpus = [["one", "two", "three"]]
        table = learn_bpe(corpus, 3)
        vocab = Vocabulary.build(corpus, table)
        vocab.save(tmp_path / "vocab.txt")
        assert Vocabulary.load(tmp_path / "vocab.txt", table).symbols == vocab.symbols
