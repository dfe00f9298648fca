import codecs
import os


from setuptools import setup, find_packages

__version__ = "0.2.1"
__title__ = "pyspr-pose"
__description__ = "Structured pose representation codec, single-stage decoder, toy trainer and multi-person pose metrics"
__author__ = "PySprPose developers"
__license__ = "Public Domain"
__copyright__ = "Public Domain, dedicated by the PySprPose developers"

###############################################################################

NAME = "pyspr-pose"
PACKAGES = find_packages(where=".")
KEYWORDS = ["pose", "keypoints", "heatmap", "displacement", "multi-person"]
CLASSIFIERS = [
    "Development Status :: 4 - Beta",
    "Intended Audience :: Developers",
    "Intended Audience :: Science/Research",
    "Natural Language :: English",
    "License :: Public Domain",
    "Operating System :: OS Independent",
    "Programming Language :: Python",
    "Programming Language :: Python :: 3",
    "Programming Language :: Python :: 3.8",
    "Programming Language :: Python :: 3.9",
    "Programming Language :: Python :: 3.10",
    "Programming Language :: Python :: 3.11",
    "Topic :: Scientific/Engineering :: Image Recognition",
]
INSTALL_REQUIRES = [
    "numpy>=1.20",
    "scipy>=1.6",
    "tqdm>=4.50",
    "jsonschema>=3.2",
]
EXTRAS_REQUIRE = {
    "test": ["pytest>=6.0"],
}

###############################################################################

HERE = os.path.abspath(os.path.dirname(__file__))


def read(*parts):
    """
    Build an absolute path from *parts* and return the contents of the
    resulting file.  Assume UTF-8 encoding.
    """
    with codecs.open(os.path.join(HERE, *parts), "rb", "utf-8") as f:
        return f.read()

if __name__ == "__main__":
    setup(
        name=NAME,
        description=__description__,
        license=__license__,
        version=__version__,
        author=__author__,
        maintainer=__author__,
        keywords=KEYWORDS,
        long_description=read("README.rst"),
        packages=PACKAGES,
        package_data={"pysprpose": ["schemas/*.json"]},
        package_dir={"": "."},
        zip_safe=False,
        classifiers=CLASSIFIERS,
        python_requires=">=3.8",
        install_requires=INSTALL_REQUIRES,
        extras_require=EXTRAS_REQUIRE,
        scripts=['bin/spr_pose.py']
    )
