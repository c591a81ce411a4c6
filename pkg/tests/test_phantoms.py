import numpy as np
import pytest

from app.backend.labels import extract_labels
from app.backend.phantoms import (
    FINDING_TYPES,
    FindingSpec,
    random_findings,
    render_report,
    synth_study,
    synth_volume,
)
from app.backend.volume import Phase


def test_synth_volume_is_deterministic():
    """The same seed and findings give identical voxels, report and QA."""
    findings = [FindingSpec("nodule", "left upper", 8.0)]
    a = synth_volume(7, findings, (16, 32, 32))
    b = synth_volume(7, findings, (16, 32, 32))
    np.testing.assert_array_equal(a[0].voxels, b[0].voxels)
    assert a[1] == b[1] and a[2] == b[2]
    c = synth_volume(8, findings, (16, 32, 32))
    assert not np.array_equal(a[0].voxels, c[0].voxels)


def test_blob_sits_in_its_region():
    """A left-upper nodule raises intensity in the low-z, low-x octant."""
    shape = (16, 32, 32)
    empty, _, _ = synth_volume(3, [], shape)
    with_nodule, _, _ = synth_volume(3, [FindingSpec("nodule", "left upper", 10.0)], shape)
    diff = with_nodule.voxels - empty.voxels
    z, y, x = np.unravel_index(np.argmax(diff), shape)
    assert z < shape[0] / 2 and x < shape[2] / 2
    assert diff.max() > 0.5


def test_report_mentions_every_finding_type():
    findings = [FindingSpec("effusion", "right lower", 20.0), FindingSpec("cardiomegaly", "central", 35.0)]
    report = render_report(findings)
    labels = extract_labels(report)
    assert labels == {"nodule": 0, "effusion": 1, "consolidation": 0, "cardiomegaly": 1}
    assert "20 mm" in report and "right lower" in report


def test_labels_follow_random_findings():
    """Extracted report labels agree with the rendered findings for many seeds."""
    for seed in range(50):
        findings = random_findings(np.random.default_rng(seed))
        present = {f.finding_type for f in findings}
        expected = {name: int(name in present) for name in FINDING_TYPES}
        assert extract_labels(render_report(findings)) == expected


def test_empty_findings_give_no_abnormality_qa():
    _, report, qa = synth_volume(0, [], (8, 16, 16))
    assert "No nodule" in report
    assert qa == [("Is there any abnormality in this volume?", "No, there is no abnormality in this volume.")]


def test_finding_spec_validation():
    with pytest.raises(ValueError):
        FindingSpec("fracture", "central", 5.0)
    with pytest.raises(ValueError):
        FindingSpec("nodule", "nowhere", 5.0)
    with pytest.raises(ValueError):
        FindingSpec("nodule", "left upper", 0.0)
    with pytest.raises(ValueError):
        synth_volume(0, [], (4, 16, 16))


def test_synth_study_tags_phases_and_keeps_in_plane_size():
    volumes, report, _ = synth_study(5, [FindingSpec("nodule", "right lower", 6.0)], (8, 16, 16))
    assert len(volumes) == 7
    assert {v.shape for v in volumes} == {(8, 16, 16)}
    assert Phase.DWI in {v.phase for v in volumes}
    assert "nodule" in report
