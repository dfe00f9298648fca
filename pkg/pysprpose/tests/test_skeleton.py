import pytest

from pysprpose.errors import SkeletonError
from pysprpose.skeleton import (
    PRESETS, ROOT, SkeletonSpec, articulated_path, describe, ensure_valid, from_dict, hierarchy_order, preset,
    resolve, to_dict, validate,
)


def _spec(levels, parents, names=None, dim=2):
    names = names or tuple("j{0}".format(i) for i in range(len(levels)))
    return SkeletonSpec(name="t", dim=dim, joint_names=names, hierarchy_level=levels, parent=parents)


class TestPresets:

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_are_valid(self, name):
        assert validate(preset(name)) == []

    def test_mpii16_layout(self, mpii16):
        assert mpii16.num_joints == 16
        assert mpii16.dim == 2
        wrist = mpii16.index("r_wrist")
        assert mpii16.hierarchy_level[wrist] == 4
        assert mpii16.joint_names[mpii16.parent[wrist]] == "r_elbow"
        assert [mpii16.joint_names[i] for i in mpii16.head_segment] == ["head_top", "upper_neck"]

    def test_panoptic_is_3d(self, panoptic):
        assert panoptic.dim == 3
        assert panoptic.num_joints == 15

    def test_unknown_preset(self):
        with pytest.raises(SkeletonError, match="Unknown skeleton preset"):
            preset("mpii17")

    def test_unknown_joint_name(self, toy6):
        with pytest.raises(SkeletonError):
            toy6.index("tail")


class TestValidation:

    def test_level_gap_is_reported(self):
        # level 4 joint hanging directly off a level 2 joint
        report = validate(_spec((2, 4), (ROOT, 0)))
        assert any(line.startswith("level gap") for line in report)

    def test_level_two_must_attach_to_root(self):
        report = validate(_spec((2, 3), (ROOT, ROOT)))
        assert any("attached to ROOT" in line for line in report)

    def test_self_parent_is_a_cycle(self):
        report = validate(_spec((2, 3), (ROOT, 1)))
        assert any(line.startswith("cycle") for line in report)

    def test_two_joint_cycle(self):
        report = validate(_spec((3, 3), (1, 0)))
        assert any(line.startswith("cycle") for line in report)

    def test_level_out_of_range(self):
        report = validate(_spec((2, 3, 4, 5), (ROOT, 0, 1, 2)))
        assert any(line.startswith("level range") for line in report)

    def test_duplicate_names(self):
        report = validate(_spec((2, 2), (ROOT, ROOT), names=("a", "a")))
        assert any(line.startswith("duplicate") for line in report)

    def test_bad_dim(self):
        assert any(line.startswith("dim") for line in validate(_spec((2,), (ROOT,), dim=4)))

    def test_ensure_valid_raises_with_every_violation(self):
        bad = _spec((2, 4), (ROOT, 0), dim=5)
        with pytest.raises(SkeletonError) as info:
            ensure_valid(bad)
        assert "dim" in str(info.value)
        assert "level gap" in str(info.value)


class TestArticulatedPaths:

    def test_path_of_level_two_joint_is_itself(self, mpii16):
        j = mpii16.index("thorax")
        assert articulated_path(mpii16, j).ordered_joints == (j,)

    def test_path_of_wrist(self, mpii16):
        path = articulated_path(mpii16, mpii16.index("l_wrist"))
        assert [mpii16.joint_names[i] for i in path.ordered_joints] == ["l_shoulder", "l_elbow", "l_wrist"]

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_every_path_ends_at_its_joint_and_starts_at_level_two(self, name):
        spec = preset(name)
        for j in range(spec.num_joints):
            path = articulated_path(spec, j).ordered_joints
            assert path[-1] == j
            assert spec.parent[path[0]] == ROOT
            assert 1 <= len(path) <= 3
            assert [spec.hierarchy_level[a] for a in path] == list(range(2, 2 + len(path)))

    @pytest.mark.parametrize("j", [-1, 6, 2.5, "neck"])
    def test_invalid_index(self, toy6, j):
        with pytest.raises(SkeletonError):
            articulated_path(toy6, j)

    def test_hierarchy_order_puts_parents_first(self, mpii16):
        order = hierarchy_order(mpii16)
        position = {j: i for i, j in enumerate(order)}
        for j, p in enumerate(mpii16.parent):
            if p != ROOT:
                assert position[p] < position[j]

    def test_describe_uses_names(self, toy6):
        assert describe(toy6)["r_elbow"] == ["r_shoulder", "r_elbow"]


class TestDocuments:

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_dict_round_trip(self, name):
        spec = preset(name)
        assert from_dict(to_dict(spec)) == spec

    def test_unknown_field_is_rejected(self, toy6):
        doc = to_dict(toy6)
        doc["colour"] = "red"
        with pytest.raises(SkeletonError, match="unknown fields"):
            from_dict(doc)

    def test_unknown_parent(self, toy6):
        doc = to_dict(toy6)
        doc["joints"][1]["parent"] = "chin"
        with pytest.raises(SkeletonError, match="unknown parent"):
            from_dict(doc)

    def test_from_dict_validates(self, toy6):
        doc = to_dict(toy6)
        doc["joints"][1]["level"] = 4
        with pytest.raises(SkeletonError, match="level gap"):
            from_dict(doc)

    def test_resolve_accepts_all_forms(self, toy6):
        assert resolve("toy6") == toy6
        assert resolve(to_dict(toy6)) == toy6
        assert resolve(toy6) is toy6
